//! Full segmentation model: encoder, final context, upsampler, head, and
//! the training-only tap branches.

use vpnext_tensor::{Graph, Scalar, Tensor, Var};

use crate::config::{ModelConfig, Supervision};
use crate::error::{ModelError, Result};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::seg::{composite_loss, ClassMask, LossTerms, SegHead};
use crate::vcr::{naive_align_loss, vcr_loss, ContextModule, FinalContext, TapBranch};
use crate::vit::{check_image_shape, Encoder, EncoderOutputs};
use crate::vitup::{Upsampled, Upsampler};

/// Parameter-name prefix of everything that exists for training only.
pub const AUX_PREFIX: &str = "aux.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Main path plus every auxiliary branch.
    Train,
    /// Main path only.
    Inference,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Inference => "inference",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "training" => Ok(Phase::Train),
            "inference" | "infer" => Ok(Phase::Inference),
            _ => Err(ModelError::Config(format!("unknown phase `{s}` (train or inference)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutputs {
    /// Main-head logits at image resolution.
    pub logits: Var,
    /// Features fed to the tap heads: normalized taps, or their replays.
    pub aux_features: Vec<Var>,
    /// Unweighted naive-align term.
    pub align: Option<Var>,
    pub encoder: EncoderOutputs,
    pub context: FinalContext,
    pub decoder: Upsampled,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainingLoss {
    pub total: Var,
    pub main: LossTerms,
    /// Weighted tap-head loss.
    pub aux: Option<Var>,
    /// Weighted naive-align loss.
    pub align: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Encoder,
    context: ContextModule,
    upsampler: Upsampler,
    head: SegHead,
    branches: Vec<TapBranch>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, ParamBuilder::fresh(seed))
    }

    /// Wraps existing parameters, which must match the architecture exactly.
    pub fn from_params(config: ModelConfig, params: &ParamStore<T>) -> Result<Self> {
        Self::build(config, ParamBuilder::load(params))
    }

    fn build(config: ModelConfig, mut pb: ParamBuilder<'_, T>) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.embed_dim;
        let encoder = Encoder::new(&mut pb, &config.encoder, &config.patch, config.image_size)?;
        let context = ContextModule::new(&mut pb, d)?;
        let upsampler = Upsampler::new(&mut pb, config.upsampler, &config.hiclr, d)?;
        let head = SegHead::new(&mut pb, "head", upsampler.out_channels(), config.num_classes)?;
        let replay = config.supervision == Supervision::Vcr;
        let branches = (0..config.supervised_taps())
            .map(|i| TapBranch::new(&mut pb, i, d, config.num_classes, replay))
            .collect::<Result<Vec<_>>>()?;
        let params = pb.finish()?;
        Ok(Model { config, params, encoder, context, upsampler, head, branches })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn context(&self) -> &ContextModule {
        &self.context
    }

    pub fn upsampler(&self) -> &Upsampler {
        &self.upsampler
    }

    pub fn head(&self) -> &SegHead {
        &self.head
    }

    pub fn branches(&self) -> &[TapBranch] {
        &self.branches
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        Model::from_params(self.config.clone(), &self.params.cast())
    }

    /// The same model without tap branches or their parameters.
    pub fn strip_for_inference(&self) -> Result<Model<T>> {
        let mut config = self.config.clone();
        config.supervision = Supervision::None;
        let mut kept = ParamStore::new();
        for (name, t) in self.params.iter().filter(|(n, _)| !n.starts_with(AUX_PREFIX)) {
            kept.insert(name, t.clone())?;
        }
        Model::from_params(config, &kept)
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, images: Var, phase: Phase) -> Result<ModelOutputs> {
        let s = g.shape(images).to_vec();
        check_image_shape(&s)?;
        let (ih, iw) = (s[1], s[2]);
        let encoder = self.encoder.encode(g, p, images)?;
        let context = g.scoped("context", |g| self.context.forward(g, p, encoder.tokens))?;
        let decoder = g.scoped("upsampler", |g| self.upsampler.upsample(g, p, context.feature, encoder.hi_res))?;
        let logits = g.scoped("head", |g| self.head.forward(g, p, decoder.feature, ih, iw))?;

        let mut aux_features = Vec::new();
        let mut align = None;
        if phase == Phase::Train && !self.branches.is_empty() {
            let detach = self.config.vcr.detach_replayed_context;
            g.scoped("aux", |g| {
                for (i, br) in self.branches.iter().enumerate() {
                    let f = g.scoped(&format!("tap{i}"), |g| br.feature(g, p, encoder.taps[i], &context, detach))?;
                    aux_features.push(f);
                }
                if self.config.supervision == Supervision::NaiveAlign {
                    let target = g.detach(encoder.tokens);
                    align = Some(naive_align_loss(g, &aux_features, target)?);
                }
                Ok::<(), ModelError>(())
            })?;
        }
        Ok(ModelOutputs { logits, aux_features, align, encoder, context, decoder })
    }

    /// Main composite loss plus the weighted auxiliary terms present in `out`.
    pub fn loss(&self, g: &mut Graph<T>, p: &Bound, out: &ModelOutputs, mask: &ClassMask) -> Result<TrainingLoss> {
        let main = g.scoped("loss", |g| composite_loss(g, out.logits, mask, &self.config.loss))?;
        let w = self.config.vcr.aux_loss_weight;
        let aux = if out.aux_features.is_empty() {
            None
        } else {
            let heads: Vec<&SegHead> = self.branches.iter().map(|b| &b.head).collect();
            Some(g.scoped("aux", |g| vcr_loss(g, p, &out.aux_features, &heads, mask, &self.config.loss, w))?)
        };
        let align = match out.align {
            Some(a) => Some(g.scale(a, w)?),
            None => None,
        };
        let mut total = main.total;
        for t in [aux, align].into_iter().flatten() {
            total = g.add(total, t)?;
        }
        Ok(TrainingLoss { total, main, aux, align })
    }

    /// Inference logits for a batch of images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(images);
        let out = self.forward(&mut g, &p, x, Phase::Inference)?;
        Ok(g.tensor(out.logits))
    }
}
