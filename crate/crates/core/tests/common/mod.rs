#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpnext::{ClassMask, ModelConfig, Variant};
use vpnext_tensor::{Scalar, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(lo..hi)))
}

pub fn image<T: Scalar>(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor<T> {
    uniform(rng, &[b, h, w, 3], 0.0, 1.0)
}

pub fn random_mask(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize, classes: u8) -> ClassMask {
    ClassMask::new(b, h, w, (0..b * h * w).map(|_| rng.gen_range(0..classes)).collect()).unwrap()
}

/// A small architecture that keeps fp64 tests quick.
pub fn tiny_config(variant: &str) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.image_size = 32;
    cfg.num_classes = 3;
    cfg.encoder.embed_dim = 8;
    cfg.encoder.heads = 2;
    cfg.encoder.num_layers = 4;
    cfg.encoder.mlp_ratio = 2.0;
    cfg.hiclr.fuse_channels = 4;
    cfg.patch.embed_dim = 8;
    let v: Variant = variant.parse().unwrap();
    cfg.apply_variant(&v);
    cfg
}

/// The default architecture with the given variant applied.
pub fn default_config(variant: &str) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.apply_variant(&variant.parse().unwrap());
    cfg
}
