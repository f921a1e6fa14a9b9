//! Segmentation head and the focal + dice + cross-entropy objective.

use vpnext_tensor::{Graph, Scalar, Tensor, Var};

use crate::config::LossWeights;
use crate::error::{ModelError, Result};
use crate::layers::LinearLayer;
use crate::params::{Bound, Init, ParamBuilder};

pub const IGNORE_INDEX: u8 = 255;

/// Soft-dice smoothing added to numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;

/// Integer labels `[b,H,W]`; [`IGNORE_INDEX`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    batch: usize,
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ClassMask {
    pub fn new(batch: usize, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != batch * height * width {
            return Err(ModelError::Input(format!(
                "mask of {} labels does not fill {batch}x{height}x{width}",
                labels.len()
            )));
        }
        Ok(ClassMask { batch, height, width, labels })
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= num_classes) {
            Some(l) => Err(ModelError::Input(format!("label {l} out of range for {num_classes} classes"))),
            None => Ok(()),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.height, self.width]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_valid(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }

    /// Concatenates masks of equal spatial size along the batch axis.
    pub fn stack(parts: &[&ClassMask]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| ModelError::Input("no masks to stack".into()))?;
        let mut labels = Vec::new();
        for m in parts {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(ModelError::Input("masks differ in spatial size".into()));
            }
            labels.extend_from_slice(&m.labels);
        }
        let batch = parts.iter().map(|m| m.batch).sum();
        ClassMask::new(batch, first.height, first.width, labels)
    }

    /// Per-pixel argmax of `logits[b,H,W,C]`; the lowest class wins ties.
    pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 4 || s[3] == 0 || s[3] > IGNORE_INDEX as usize {
            return Err(ModelError::Input(format!("expected logits [b,H,W,C], got {s:?}")));
        }
        let labels = logits
            .data()
            .chunks(s[3])
            .map(|row| {
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        ClassMask::new(s[0], s[1], s[2], labels)
    }
}

/// 1×1 projection to class logits followed by bilinear resizing.
#[derive(Clone, Debug)]
pub struct SegHead {
    proj: LinearLayer,
}

impl SegHead {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, in_dim: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(ModelError::Config("a segmentation head needs at least 2 classes".into()));
        }
        Ok(SegHead { proj: LinearLayer::new(pb, name, in_dim, num_classes, Init::LeCun, true)? })
    }

    pub fn projection(&self) -> &LinearLayer {
        &self.proj
    }

    /// Logits at `out_h × out_w`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, feat: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let logits = self.proj.forward(g, p, feat)?;
        seg_head_resize(g, logits, out_h, out_w)
    }
}

fn seg_head_resize<T: Scalar>(g: &mut Graph<T>, logits: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let s = g.shape(logits);
    if (s[1], s[2]) == (out_h, out_w) {
        return Ok(logits);
    }
    Ok(g.resize_bilinear(logits, out_h, out_w)?)
}

/// Scalar loss terms of one composite objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub focal: Var,
    pub dice: Var,
    /// Set when every pixel was ignored; every term is then a constant zero.
    pub all_ignored: bool,
}

/// `w.ce·CE + w.focal·Focal(γ) + w.dice·(1 − mean soft dice)` over the valid
/// pixels of `mask`. CE and focal are averaged over valid pixels; dice is
/// computed per class over the whole batch and averaged over classes.
pub fn composite_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, mask: &ClassMask, w: &LossWeights) -> Result<LossTerms> {
    w.validate()?;
    let s = g.shape(logits).to_vec();
    if s.len() != 4 || s[..3] != mask.shape() {
        return Err(ModelError::Input(format!(
            "logits {s:?} do not match mask {:?}",
            mask.shape()
        )));
    }
    let c = s[3];
    mask.validate(c)?;
    let n_valid = mask.num_valid();
    if n_valid == 0 {
        let z = g.constant_scalar(T::zero());
        return Ok(LossTerms { total: z, ce: z, focal: z, dice: z, all_ignored: true });
    }
    let pixels = mask.labels.len();
    let mut onehot = vec![T::zero(); pixels * c];
    let mut valid = vec![T::zero(); pixels * c];
    let mut tsum = vec![DICE_SMOOTH; c];
    for (i, &l) in mask.labels.iter().enumerate() {
        if l != IGNORE_INDEX {
            onehot[i * c + l as usize] = T::one();
            valid[i * c..(i + 1) * c].fill(T::one());
            tsum[l as usize] += 1.0;
        }
    }
    let onehot = g.constant(&Tensor::new(s.clone(), onehot)?);
    let valid = g.constant(&Tensor::new(s.clone(), valid)?);
    let tsum = g.constant(&Tensor::new([c], tsum.into_iter().map(T::from_f64).collect())?);
    let inv_n = 1.0 / n_valid as f64;

    let logp = g.log_softmax(logits)?;
    let prob = g.exp(logp)?;
    let lp_t = g.mul(logp, onehot)?;
    let logpt = g.sum_axis(lp_t, 3)?;
    let p_t = g.mul(prob, onehot)?;

    let ce_sum = g.sum(logpt)?;
    let ce = g.scale(ce_sum, -inv_n)?;

    let pt = g.sum_axis(p_t, 3)?;
    let miss = g.scale(pt, -1.0)?;
    let miss = g.add_scalar(miss, 1.0)?;
    let modulator = g.powf(miss, w.focal_gamma)?;
    let focal_px = g.mul(modulator, logpt)?;
    let focal_sum = g.sum(focal_px)?;
    let focal = g.scale(focal_sum, -inv_n)?;

    let inter = g.reshape(p_t, &[pixels, c])?;
    let inter = g.sum_axis(inter, 0)?;
    let p_valid = g.mul(prob, valid)?;
    let psum = g.reshape(p_valid, &[pixels, c])?;
    let psum = g.sum_axis(psum, 0)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTH)?;
    let den = g.add(psum, tsum)?;
    let dice_c = g.div(num, den)?;
    let mean_dice = g.mean(dice_c)?;
    let dice = g.scale(mean_dice, -1.0)?;
    let dice = g.add_scalar(dice, 1.0)?;

    let t_ce = g.scale(ce, w.ce_weight)?;
    let t_focal = g.scale(focal, w.focal_weight)?;
    let t_dice = g.scale(dice, w.dice_weight)?;
    let total = g.add(t_ce, t_focal)?;
    let total = g.add(total, t_dice)?;
    Ok(LossTerms { total, ce, focal, dice, all_ignored: false })
}
