#![allow(dead_code)]

use vpnext_harness::config::RunConfig;
use vpnext_harness::data::{generate, Corpus, SynthSpec};

/// A model and corpus small enough for a few debug-speed training steps.
pub fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = SynthSpec { num_train: 8, num_eval: 4, image_size: 32, seed: 3, ..SynthSpec::default() };
    cfg.model.encoder.embed_dim = 8;
    cfg.model.encoder.heads = 2;
    cfg.model.encoder.num_layers = 4;
    cfg.model.encoder.mlp_ratio = 2.0;
    cfg.model.hiclr.fuse_channels = 4;
    cfg.variant = "vcr-2+real-2".into();
    cfg.train.batch_size = 2;
    cfg.train.steps = 4;
    cfg.train.eval_batch_size = 4;
    cfg
}

pub fn tiny_corpus(cfg: &RunConfig) -> Corpus {
    generate(&cfg.data).unwrap()
}

pub const TINY_JSON: &str = r#"{
  "data": { "numTrain": 8, "numEval": 4, "imageSize": 32, "seed": 3 },
  "model": { "encoder": { "numLayers": 4, "heads": 2, "embedDim": 8, "mlpRatio": 2.0 }, "hiclr": { "fuseChannels": 4 } },
  "variant": "vcr-2+real-2",
  "train": { "batchSize": 2, "steps": 4, "evalBatchSize": 4 }
}"#;
