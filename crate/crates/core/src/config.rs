use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, ModelError, Result};

/// Patch-embedding convolution geometry.
///
/// Running the 16-pixel kernel at stride 4 with right/bottom padding of
/// `kernel - stride` yields an exact 1/4 grid whose every fourth position is
/// the ordinary stride-16 embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PatchEmbedConfig {
    pub kernel: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub pad_right_bottom: usize,
}

impl PatchEmbedConfig {
    pub fn new(kernel: usize, stride: usize, embed_dim: usize) -> Self {
        PatchEmbedConfig { kernel, stride, embed_dim, pad_right_bottom: kernel.saturating_sub(stride) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.kernel {
            return config_err(format!("patch stride {} must lie in 1..={}", self.stride, self.kernel));
        }
        if self.pad_right_bottom != self.kernel - self.stride {
            return config_err(format!(
                "padRightBottom must be kernel - stride = {}, got {}",
                self.kernel - self.stride,
                self.pad_right_bottom
            ));
        }
        if !self.kernel.is_multiple_of(self.stride) {
            return config_err(format!("patch kernel {} is not a multiple of stride {}", self.kernel, self.stride));
        }
        if self.embed_dim == 0 {
            return config_err("embedDim must be positive");
        }
        Ok(())
    }

    /// True when the embedding runs below the patch size and a hidden
    /// high-resolution grid is available.
    pub fn has_hi_res(&self) -> bool {
        self.stride < self.kernel
    }

    /// Subsampling step from the embedding grid to the token grid.
    pub fn token_step(&self) -> usize {
        self.kernel / self.stride
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: f64,
    /// 1-based block indices whose outputs are exposed as taps.
    pub tap_indices: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { num_layers: 8, heads: 4, embed_dim: 64, mlp_ratio: 4.0, tap_indices: vec![3, 6] }
    }
}

/// Evenly spread `count` tap indices strictly before the last of `num_layers` blocks.
pub fn spread_taps(count: usize, num_layers: usize) -> Vec<usize> {
    (1..=count).map(|j| (j * num_layers).div_ceil(count + 1)).collect()
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return config_err("numLayers must be at least 2");
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return config_err(format!("embedDim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if !(self.mlp_ratio > 0.0) {
            return config_err("mlpRatio must be positive");
        }
        if self.tap_indices.is_empty() {
            return config_err("tapIndices must not be empty");
        }
        for (j, &t) in self.tap_indices.iter().enumerate() {
            if t < 1 || t >= self.num_layers {
                return config_err(format!("tap index {t} out of range 1..{}", self.num_layers));
            }
            if j > 0 && t <= self.tap_indices[j - 1] {
                return config_err("tapIndices must be strictly increasing");
            }
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct VcrConfig {
    pub num_replay_layers: usize,
    pub aux_loss_weight: f64,
    pub detach_replayed_context: bool,
}

impl Default for VcrConfig {
    fn default() -> Self {
        VcrConfig { num_replay_layers: 2, aux_loss_weight: 0.4, detach_replayed_context: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Refiner {
    Deformable,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct HiclrConfig {
    pub iterations: usize,
    pub refiner_kernel: usize,
    pub fuse_channels: usize,
    pub refiner: Refiner,
    pub share_offset_predictor: bool,
}

impl Default for HiclrConfig {
    fn default() -> Self {
        HiclrConfig {
            iterations: 3,
            refiner_kernel: 3,
            fuse_channels: 32,
            refiner: Refiner::Deformable,
            share_offset_predictor: false,
        }
    }
}

pub const MAX_HICLR_ITERATIONS: usize = 5;

impl HiclrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations > MAX_HICLR_ITERATIONS {
            return config_err(format!("HiCLR iterations {} exceed {MAX_HICLR_ITERATIONS}", self.iterations));
        }
        if self.refiner_kernel == 0 || self.refiner_kernel.is_multiple_of(2) {
            return config_err("refinerKernel must be odd");
        }
        if self.fuse_channels == 0 {
            return config_err("fuseChannels must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum UpsamplerKind {
    Bilinear,
    MockPyramid,
    RealPyramid,
}

/// Training-time branch attached to the encoder taps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Supervision {
    None,
    DeepSupervision,
    NaiveAlign,
    Vcr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct LossWeights {
    pub focal_weight: f64,
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { focal_weight: 1.0, dice_weight: 1.0, ce_weight: 1.0, focal_gamma: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.focal_weight, self.dice_weight, self.ce_weight, self.focal_gamma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return config_err("loss weights must be finite and non-negative");
        }
        if self.focal_weight == 0.0 && self.dice_weight == 0.0 && self.ce_weight == 0.0 {
            return config_err("at least one loss weight must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub patch: PatchEmbedConfig,
    pub encoder: EncoderConfig,
    pub vcr: VcrConfig,
    pub hiclr: HiclrConfig,
    pub upsampler: UpsamplerKind,
    pub supervision: Supervision,
    pub loss: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        ModelConfig {
            image_size: 64,
            num_classes: 5,
            patch: PatchEmbedConfig::new(16, 16, encoder.embed_dim),
            encoder,
            vcr: VcrConfig::default(),
            hiclr: HiclrConfig::default(),
            upsampler: UpsamplerKind::Bilinear,
            supervision: Supervision::Vcr,
            loss: LossWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.encoder.validate()?;
        self.hiclr.validate()?;
        self.loss.validate()?;
        if self.patch.kernel != 16 {
            return config_err(format!("patch kernel must be 16, got {}", self.patch.kernel));
        }
        if self.patch.embed_dim != self.encoder.embed_dim {
            return config_err("patch embedDim differs from encoder embedDim");
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return config_err(format!("imageSize {} is not a positive multiple of 16", self.image_size));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return config_err("numClasses must lie in 2..=255");
        }
        if self.upsampler == UpsamplerKind::RealPyramid && !self.patch.has_hi_res() {
            return config_err("realPyramid upsampler requires patch stride < kernel");
        }
        if self.supervision == Supervision::Vcr {
            let k = self.vcr.num_replay_layers;
            if k == 0 || k > 3 {
                return config_err(format!("numReplayLayers {k} outside 1..=3"));
            }
            if k > self.encoder.tap_indices.len() {
                return config_err(format!(
                    "numReplayLayers {k} exceeds the {} configured taps",
                    self.encoder.tap_indices.len()
                ));
            }
        }
        if !self.vcr.aux_loss_weight.is_finite() || self.vcr.aux_loss_weight < 0.0 {
            return config_err("auxLossWeight must be finite and non-negative");
        }
        Ok(())
    }

    /// Number of taps that carry an auxiliary branch.
    pub fn supervised_taps(&self) -> usize {
        match self.supervision {
            Supervision::None => 0,
            Supervision::Vcr => self.vcr.num_replay_layers,
            Supervision::DeepSupervision | Supervision::NaiveAlign => self.encoder.tap_indices.len(),
        }
    }

    pub fn apply_variant(&mut self, v: &Variant) {
        let taps = match v.supervision {
            Supervision::Vcr => v.replay_layers,
            Supervision::None => self.encoder.tap_indices.len(),
            _ => 2,
        };
        if self.encoder.tap_indices.len() != taps || self.encoder.validate().is_err() {
            self.encoder.tap_indices = spread_taps(taps, self.encoder.num_layers);
        }
        self.supervision = v.supervision;
        if v.supervision == Supervision::Vcr {
            self.vcr.num_replay_layers = v.replay_layers;
        }
        self.upsampler = v.upsampler;
        if v.upsampler != UpsamplerKind::Bilinear {
            self.hiclr.iterations = v.iterations;
        }
        let stride = if v.upsampler == UpsamplerKind::RealPyramid { 4 } else { 16 };
        self.patch = PatchEmbedConfig::new(16, stride, self.encoder.embed_dim);
    }
}

/// An ablation arm such as `vcr-2+real-3`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub supervision: Supervision,
    pub replay_layers: usize,
    pub upsampler: UpsamplerKind,
    pub iterations: usize,
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| ModelError::Config(format!("unknown variant `{s}`: {what}"));
        let lower = s.trim().to_ascii_lowercase();
        let (sup, up) = match lower.split_once('+') {
            Some((a, b)) => (a, Some(b)),
            None => (lower.as_str(), None),
        };
        let (supervision, replay_layers) = match sup {
            "none" => (Supervision::None, 0),
            "ds" => (Supervision::DeepSupervision, 0),
            "naive-align" | "na" => (Supervision::NaiveAlign, 0),
            "vcr" => (Supervision::Vcr, 2),
            other => match other.strip_prefix("vcr-").and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if (1..=3).contains(&k) => (Supervision::Vcr, k),
                _ => return Err(bad("expected none, ds, naive-align, vcr or vcr-1..3")),
            },
        };
        let parse_iters = |rest: &str, default: usize| -> Result<usize> {
            if rest.is_empty() {
                return Ok(default);
            }
            match rest.strip_prefix('-').and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if k <= MAX_HICLR_ITERATIONS => Ok(k),
                _ => Err(bad("expected an iteration count 0..=5")),
            }
        };
        let (upsampler, iterations) = match up {
            None | Some("bilinear") => (UpsamplerKind::Bilinear, 0),
            Some(u) if u.starts_with("mock") => (UpsamplerKind::MockPyramid, parse_iters(&u[4..], 2)?),
            Some(u) if u.starts_with("real") => (UpsamplerKind::RealPyramid, parse_iters(&u[4..], 3)?),
            Some(_) => return Err(bad("expected bilinear, mock[-k] or real[-k]")),
        };
        Ok(Variant { supervision, replay_layers, upsampler, iterations })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.supervision {
            Supervision::None => write!(f, "none")?,
            Supervision::DeepSupervision => write!(f, "ds")?,
            Supervision::NaiveAlign => write!(f, "naive-align")?,
            Supervision::Vcr => write!(f, "vcr-{}", self.replay_layers)?,
        }
        match self.upsampler {
            UpsamplerKind::Bilinear => write!(f, "+bilinear"),
            UpsamplerKind::MockPyramid => write!(f, "+mock-{}", self.iterations),
            UpsamplerKind::RealPyramid => write!(f, "+real-{}", self.iterations),
        }
    }
}
