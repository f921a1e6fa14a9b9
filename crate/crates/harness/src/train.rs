//! Training loop, evaluation and run manifests.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vpnext::cost::CostReport;
use vpnext::{count_cost, ClassMask, ConfusionMatrix, Model, ModelConfig, ModelError, ParamStore, Phase};
use vpnext_tensor::{Graph, Tensor, TensorError};

use crate::config::TrainConfig;
use crate::data::{batch, Corpus, Sample};
use crate::error::{HarnessError, Result};
use crate::optim::{clip_global_norm, poly_lr, AdamW, AdamWSettings};

/// Content hash of the sources this binary was built from.
pub const CODE_HASH: &str = env!("VPNX_CODE_HASH");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub num_pixels: u64,
}

impl EvalReport {
    fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let num_pixels = (0..cm.num_classes()).flat_map(|t| (0..cm.num_classes()).map(move |p| (t, p))).map(|(t, p)| cm.count(t, p)).sum();
        EvalReport { miou: cm.mean_iou(false), per_class_iou: cm.per_class_iou(), num_pixels }
    }
}

/// Dataset-accumulated confusion matrix of `model` over `samples`.
pub fn confusion(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config().num_classes)?;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, truth) = batch(&refs)?;
        let logits = model.predict(&images)?;
        cm.add(&ClassMask::argmax(&logits)?, &truth)?;
    }
    Ok(cm)
}

pub fn evaluate(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<EvalReport> {
    Ok(EvalReport::from_confusion(&confusion(model, samples, batch_size)?))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Parameters at the evaluation with the highest mIoU.
    pub best_params: ParamStore<f32>,
    pub best_step: usize,
    pub best_eval: EvalReport,
    /// `(step, mIoU)` of every evaluation.
    pub evals: Vec<(usize, f64)>,
    pub log: Vec<StepLog>,
    pub wall_time_secs: f64,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|s| s.loss).collect()
    }

    pub fn best_model(&self) -> Result<Model<f32>> {
        Ok(Model::from_params(self.model.config().clone(), &self.best_params)?)
    }
}

/// Epoch-wise shuffled mini-batches drawn from a seeded stream.
struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        BatchOrder { rng, order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Loss and parameter gradients for one batch. A non-finite value yields
/// `(NaN, [], Some(offender))` where the offender is a parameter name or the
/// `scope:op` that produced it.
pub fn loss_and_grads(model: &Model<f32>, images: &Tensor<f32>, mask: &ClassMask) -> Result<(f64, Vec<Tensor<f32>>, Option<String>)> {
    if let Some((name, _)) = model.params().iter().find(|(_, t)| !t.is_finite()) {
        return Ok((f64::NAN, Vec::new(), Some(name.to_string())));
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let x = g.constant(images);
    let total = model.forward(&mut g, &p, x, Phase::Train).and_then(|out| model.loss(&mut g, &p, &out, mask));
    let total = match total {
        Ok(l) => l.total,
        Err(ModelError::Tensor(TensorError::NonFinite { op, scope })) => {
            return Ok((f64::NAN, Vec::new(), Some(format!("{scope}:{op}"))));
        }
        Err(e) => return Err(e.into()),
    };
    let value = g.scalar(total) as f64;
    let mut grads = g.backward(total)?;
    Ok((value, p.vars().iter().map(|&v| grads.take(v)).collect(), None))
}

/// Trains a fresh model seeded by `tc.seed`, calling `on_step` after every
/// update.
pub fn train(
    model_cfg: &ModelConfig,
    corpus: &Corpus,
    tc: &TrainConfig,
    on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    train_model(Model::new(model_cfg.clone(), tc.seed)?, corpus, tc, on_step)
}

/// As [`train`] starting from the given parameters.
pub fn train_model(
    mut model: Model<f32>,
    corpus: &Corpus,
    tc: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    tc.validate()?;
    let start = Instant::now();
    let settings = AdamWSettings { beta1: tc.beta1, beta2: tc.beta2, eps: tc.eps, weight_decay: tc.weight_decay };
    let mut opt = AdamW::new(settings, model.params());
    let mut order = BatchOrder::new(corpus.train.len(), tc.seed);
    let mut log = Vec::with_capacity(tc.steps);
    let mut best: Option<(EvalReport, ParamStore<f32>, usize)> = None;
    let mut evals = Vec::new();

    for step in 0..tc.steps {
        let picked: Vec<&Sample> = order.next(tc.batch_size).into_iter().map(|i| &corpus.train[i]).collect();
        let (images, mask) = batch(&picked)?;
        let (loss, mut grads, bad) = loss_and_grads(&model, &images, &mask)?;
        if !loss.is_finite() {
            return Err(HarnessError::NonFinite { step, tensor: bad.unwrap_or_else(|| "loss".into()) });
        }
        let (grad_norm, clipped_norm) = clip_global_norm(&mut grads, tc.clip_norm);
        let lr = poly_lr(tc.base_lr, step, tc.steps, tc.poly_power);
        opt.step(model.params_mut(), &grads, lr);
        let entry = StepLog { step, loss, lr, grad_norm, clipped_norm };
        on_step(&entry);
        log.push(entry);

        let last = step + 1 == tc.steps;
        if last || (tc.eval_every > 0 && (step + 1) % tc.eval_every == 0) {
            let report = evaluate(&model, &corpus.eval, tc.eval_batch_size)?;
            evals.push((step + 1, report.miou));
            if best.as_ref().is_none_or(|(b, _, _)| report.miou > b.miou) {
                best = Some((report, model.params().clone(), step + 1));
            }
        }
    }
    let (best_eval, best_params, best_step) = match best {
        Some(b) => b,
        None => (evaluate(&model, &corpus.eval, tc.eval_batch_size)?, model.params().clone(), 0),
    };
    Ok(TrainOutcome { model, best_params, best_step, best_eval, evals, log, wall_time_secs: start.elapsed().as_secs_f64() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub code_hash: String,
    pub variant: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_seed: u64,
    pub class_names: Vec<String>,
    pub losses: Vec<f64>,
    pub best_step: usize,
    /// Evaluation of the saved (best) checkpoint.
    pub eval: EvalReport,
    pub train_cost: CostReport,
    pub inference_cost: CostReport,
    pub checkpoint: String,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn new(variant: &str, corpus: &Corpus, tc: &TrainConfig, outcome: &TrainOutcome, checkpoint: &str) -> Result<Self> {
        let model = &outcome.model;
        let size = model.config().image_size;
        Ok(RunManifest {
            code_hash: CODE_HASH.into(),
            variant: variant.into(),
            model: model.config().clone(),
            train: tc.clone(),
            data_seed: corpus.synth.seed,
            class_names: corpus.synth.class_names(),
            losses: outcome.losses(),
            best_step: outcome.best_step,
            eval: outcome.best_eval.clone(),
            train_cost: count_cost(model, size, Phase::Train)?,
            inference_cost: count_cost(model, size, Phase::Inference)?,
            checkpoint: checkpoint.into(),
            wall_time_secs: outcome.wall_time_secs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| HarnessError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::format(path, e.to_string()))
    }
}
