#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpnext_tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

pub fn normal_ish(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

/// Naive quintuple loop: cross-correlation over channels-last maps with
/// zero padding, bias added after the tap sum.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_reference(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad_top: usize,
    pad_bottom: usize,
    pad_left: usize,
    pad_right: usize,
) -> Tensor<f64> {
    let (b, h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, co) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let oh = (h + pad_top + pad_bottom - kh) / stride + 1;
    let ow = (w + pad_left + pad_right - kw) / stride + 1;
    let mut out = Tensor::zeros([b, oh, ow, co]);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad_top as isize;
                            let ix = (ox * stride + kx) as isize - pad_left as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..ci {
                                acc += x.at(&[bi, iy as usize, ix as usize, c]) * k.at(&[ky, kx, c, o]);
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += bias.data()[o];
                    }
                    out.data_mut()[((bi * oh + oy) * ow + ox) * co + o] = acc;
                }
            }
        }
    }
    out
}
