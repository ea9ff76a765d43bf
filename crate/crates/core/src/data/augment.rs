//! Light augmentation pipeline for the contrastive pretext task: pad-shift
//! crop, horizontal flip, pixel noise, brightness jitter. All draws come
//! from the caller's RNG stream.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Maximum shift in pixels applied via zero-pad and crop.
    pub max_shift: usize,
    pub hflip_prob: f64,
    /// Amplitude of additive uniform pixel noise.
    pub noise_amp: f64,
    /// Multiplicative brightness jitter range: factor in [1-j, 1+j].
    pub brightness_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift: 2,
            hflip_prob: 0.5,
            noise_amp: 0.05,
            brightness_jitter: 0.1,
        }
    }
}

/// Augment every image of a [B, H, W, C] batch independently.
pub fn augment_batch(batch: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let (b, h, w, c) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    let mut out = batch.clone();
    let s = cfg.max_shift as i64;
    for bi in 0..b {
        let dy = if s > 0 { rng.gen_range(-s..=s) } else { 0 };
        let dx = if s > 0 { rng.gen_range(-s..=s) } else { 0 };
        let flip = cfg.hflip_prob > 0.0 && rng.gen_range(0.0..1.0) < cfg.hflip_prob;
        let gain = if cfg.brightness_jitter > 0.0 {
            rng.gen_range(1.0 - cfg.brightness_jitter..1.0 + cfg.brightness_jitter)
        } else {
            1.0
        };
        for hi in 0..h {
            for wi in 0..w {
                // Source pixel after shift; zero outside the frame.
                let src_w = if flip { w - 1 - wi } else { wi };
                let sh = hi as i64 + dy;
                let sw = src_w as i64 + dx;
                for ci in 0..c {
                    let v = if sh >= 0 && sh < h as i64 && sw >= 0 && sw < w as i64 {
                        batch.data()[batch.idx4(bi, sh as usize, sw as usize, ci)]
                    } else {
                        0.0
                    };
                    let noise = if cfg.noise_amp > 0.0 {
                        rng.gen_range(-cfg.noise_amp..cfg.noise_amp)
                    } else {
                        0.0
                    };
                    let idx = out.idx4(bi, hi, wi, ci);
                    out.data_mut()[idx] = (v * gain + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// Two independently-augmented views of the same batch.
pub fn two_views(batch: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    (augment_batch(batch, cfg, rng), augment_batch(batch, cfg, rng))
}

/// No-op config for deterministic tests.
pub fn no_augmentation() -> AugmentConfig {
    AugmentConfig {
        max_shift: 0,
        hflip_prob: 0.0,
        noise_amp: 0.0,
        brightness_jitter: 0.0,
    }
}
