//! Shared fixtures for the benchmarks.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lambda_kws::attention::{AttentionConfig, AttentionParams};
use lambda_kws::augment::NoiseBank;
use lambda_kws::frontend::{AudioClip, CLIP_SAMPLES, N_FRAMES, N_MELS};
use lambda_kws::lambda::{Context, LambdaConfig, LambdaParams};
use lambda_kws::scaling::{BENCH_D, BENCH_HEADS, BENCH_KEY_DEPTH, BENCH_SCOPE};
use lambda_kws::tensor::Tensor;

/// Sequence lengths of the scaling sweep.
pub const SWEEP: [usize; 4] = [64, 128, 256, 512];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Input `[n, d]` and weights for multi-head attention.
pub fn attention(n: usize) -> (Tensor, AttentionParams) {
    let mut r = rng(n as u64);
    let cfg = AttentionConfig { n, d: BENCH_D, h: BENCH_HEADS, d_k: BENCH_KEY_DEPTH, d_v: BENCH_D / BENCH_HEADS };
    let p = AttentionParams::init(&cfg, &mut r).expect("valid attention config");
    (Tensor::normal([n, BENCH_D], 1.0, &mut r), p)
}

/// Input `[d, n]`, weights and config for a global or local lambda layer.
pub fn lambda(n: usize, local: bool) -> (Tensor, LambdaParams, LambdaConfig) {
    let mut r = rng(n as u64 + 1);
    let context = if local { Context::Local { r: BENCH_SCOPE } } else { Context::Global { n } };
    let cfg = LambdaConfig { d_in: BENCH_D, d_out: BENCH_D, h: BENCH_HEADS, d_k: BENCH_KEY_DEPTH, context };
    let p = LambdaParams::init(&cfg, &mut r).expect("valid lambda config");
    (Tensor::normal([BENCH_D, n], 1.0, &mut r), p, cfg)
}

/// One second of a decaying two-tone chord with a little hiss.
pub fn tone_clip() -> AudioClip {
    let samples = (0..CLIP_SAMPLES)
        .map(|i| {
            let t = i as f64 / 16_000.0;
            let hiss = ((i * 7919) % 1000) as f64 / 1000.0 - 0.5;
            0.4 * (-2.0 * t).exp() * ((440.0 * std::f64::consts::TAU * t).sin() + 0.5 * (660.0 * std::f64::consts::TAU * t).sin())
                + 0.01 * hiss
        })
        .collect();
    AudioClip::new(samples)
}

pub fn noise_bank() -> NoiseBank {
    let clip = (0..4 * CLIP_SAMPLES).map(|i| (((i * 48271) % 2017) as f64 / 2017.0 - 0.5) * 0.2).collect();
    NoiseBank::new(vec![clip]).expect("noise clip is long enough")
}

/// Random log-mel batch `[b, 40, 100]`.
pub fn features(b: usize) -> Tensor {
    Tensor::normal([b, N_MELS, N_FRAMES], 1.0, &mut rng(b as u64))
}
