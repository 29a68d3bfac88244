//! Train-time waveform augmentation.
//!
//! Each disturbance fires independently with its own probability. When
//! several fire they run in a fixed order: stretch, pitch, shift, crop,
//! noise, clip distortion, volume. The result is refit to one second and
//! clamped to `[-1, 1]`.

mod vocoder;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KwsError, Result};
use crate::frontend::{fit_length, AudioClip, CLIP_SAMPLES, SAMPLE_RATE};

pub use vocoder::{pitch_shift, resample_linear, time_stretch};

/// Power assumed for a silent clip when mixing noise at a given SNR.
pub const SILENT_REFERENCE_POWER: f64 = 1e-4;

/// Probability and parameter range of one disturbance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disturbance {
    pub p: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Disturbance {
    pub const fn new(p: f64, lo: f64, hi: f64) -> Self {
        Disturbance { p, lo, hi }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(KwsError::config(format!("augment.{name}.p must be in [0, 1], got {}", self.p)));
        }
        if !(self.lo <= self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(KwsError::config(format!(
                "augment.{name} range {}..{} is invalid",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        let fire = rng.gen::<f64>() < self.p;
        let v = if self.lo == self.hi { self.lo } else { rng.gen_range(self.lo..=self.hi) };
        fire.then_some(v)
    }
}

/// The seven disturbances. Units: SNR in dB, clip threshold as a fraction,
/// crop and shift in milliseconds, pitch in semitones, stretch as a rate,
/// volume in dB.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationPolicy {
    pub noise: Disturbance,
    pub clip: Disturbance,
    pub crop: Disturbance,
    pub pitch: Disturbance,
    pub shift: Disturbance,
    pub stretch: Disturbance,
    pub volume: Disturbance,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::recipe()
    }
}

impl AugmentationPolicy {
    /// The published policy.
    pub fn recipe() -> Self {
        AugmentationPolicy {
            noise: Disturbance::new(0.7, 0.0, 15.0),
            clip: Disturbance::new(0.2, 0.2, 0.4),
            crop: Disturbance::new(0.5, 10.0, 100.0),
            pitch: Disturbance::new(0.3, -4.0, 4.0),
            shift: Disturbance::new(0.3, -200.0, 200.0),
            stretch: Disturbance::new(0.3, 0.75, 1.25),
            volume: Disturbance::new(0.5, -5.0, 5.0),
        }
    }

    /// Every probability zero.
    pub fn none() -> Self {
        let mut p = Self::recipe();
        for (_, d) in p.entries_mut() {
            d.p = 0.0;
        }
        p
    }

    pub fn entries(&self) -> [(&'static str, Disturbance); 7] {
        [
            ("noise", self.noise),
            ("clip", self.clip),
            ("crop", self.crop),
            ("pitch", self.pitch),
            ("shift", self.shift),
            ("stretch", self.stretch),
            ("volume", self.volume),
        ]
    }

    pub fn entries_mut(&mut self) -> [(&'static str, &mut Disturbance); 7] {
        [
            ("noise", &mut self.noise),
            ("clip", &mut self.clip),
            ("crop", &mut self.crop),
            ("pitch", &mut self.pitch),
            ("shift", &mut self.shift),
            ("stretch", &mut self.stretch),
            ("volume", &mut self.volume),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, d) in self.entries() {
            d.validate(name)?;
        }
        if self.stretch.lo <= 0.0 {
            return Err(KwsError::config("augment.stretch rates must be positive"));
        }
        if self.clip.lo < 0.0 || self.clip.hi > 1.0 {
            return Err(KwsError::config("augment.clip thresholds must lie in [0, 1]"));
        }
        if self.crop.lo < 0.0 {
            return Err(KwsError::config("augment.crop lengths must be non-negative"));
        }
        Ok(())
    }
}

/// Background-noise recordings, each at least one second long.
#[derive(Clone, Debug, Default)]
pub struct NoiseBank {
    clips: Vec<Vec<f64>>,
}

impl NoiseBank {
    pub fn new(clips: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(i) = clips.iter().position(|c| c.len() < CLIP_SAMPLES) {
            return Err(KwsError::config(format!(
                "noise recording {i} has {} samples, needs at least {CLIP_SAMPLES}",
                clips[i].len()
            )));
        }
        Ok(NoiseBank { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clips(&self) -> &[Vec<f64>] {
        &self.clips
    }

    /// A random one-second segment of a random recording.
    pub fn segment<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&[f64]> {
        if self.clips.is_empty() {
            return None;
        }
        let c = &self.clips[rng.gen_range(0..self.clips.len())];
        let off = rng.gen_range(0..=c.len() - CLIP_SAMPLES);
        Some(&c[off..off + CLIP_SAMPLES])
    }
}

/// The disturbances chosen for one clip, with their parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Plan {
    pub stretch: Option<f64>,
    pub pitch: Option<f64>,
    /// Samples, positive delays the audio.
    pub shift: Option<isize>,
    /// `(start, length)` in samples.
    pub crop: Option<(usize, usize)>,
    /// `(snr_db, recording, offset)`.
    pub noise: Option<(f64, usize, usize)>,
    pub clip: Option<f64>,
    pub volume: Option<f64>,
}

impl Plan {
    /// Which disturbances fire, in the order of [`AugmentationPolicy::entries`].
    pub fn fired(&self) -> [bool; 7] {
        [
            self.noise.is_some(),
            self.clip.is_some(),
            self.crop.is_some(),
            self.pitch.is_some(),
            self.shift.is_some(),
            self.stretch.is_some(),
            self.volume.is_some(),
        ]
    }
}

pub struct Augmenter {
    policy: AugmentationPolicy,
    noise: NoiseBank,
}

impl Augmenter {
    pub fn new(policy: AugmentationPolicy, noise: NoiseBank) -> Result<Self> {
        policy.validate()?;
        if policy.noise.p > 0.0 && noise.is_empty() {
            return Err(KwsError::config("background noise is enabled but the noise bank is empty"));
        }
        Ok(Augmenter { policy, noise })
    }

    pub fn policy(&self) -> &AugmentationPolicy {
        &self.policy
    }

    pub fn sample_plan<R: Rng + ?Sized>(&self, rng: &mut R) -> Plan {
        let p = &self.policy;
        let ms = SAMPLE_RATE as f64 / 1000.0;
        let noise = p.noise.sample(rng).map(|snr| {
            let i = rng.gen_range(0..self.noise.len());
            let off = rng.gen_range(0..=self.noise.clips[i].len() - CLIP_SAMPLES);
            (snr, i, off)
        });
        let clip = p.clip.sample(rng);
        let crop = p.crop.sample(rng).map(|len_ms| {
            let len = ((len_ms * ms).round() as usize).min(CLIP_SAMPLES);
            (rng.gen_range(0..=CLIP_SAMPLES - len), len)
        });
        let pitch = p.pitch.sample(rng);
        let shift = p.shift.sample(rng).map(|s| (s * ms).round() as isize);
        let stretch = p.stretch.sample(rng);
        let volume = p.volume.sample(rng);
        Plan { stretch, pitch, shift, crop, noise, clip, volume }
    }

    pub fn apply_plan(&self, clip: &AudioClip, plan: &Plan) -> Result<AudioClip> {
        let mut x = clip.samples.clone();
        if let Some(rate) = plan.stretch {
            x = fit_length(time_stretch(&x, rate)?, CLIP_SAMPLES);
        }
        if let Some(s) = plan.pitch {
            x = pitch_shift(&x, s)?;
        }
        x = fit_length(x, CLIP_SAMPLES);
        if let Some(s) = plan.shift {
            x = shift(&x, s);
        }
        if let Some((start, len)) = plan.crop {
            x[start..start + len].fill(0.0);
        }
        if let Some((snr, i, off)) = plan.noise {
            x = mix_at_snr(&x, &self.noise.clips[i][off..off + CLIP_SAMPLES], snr)?;
        }
        if let Some(t) = plan.clip {
            clip_distort(&mut x, t);
        }
        if let Some(db) = plan.volume {
            let g = 10f64.powf(db / 20.0);
            x.iter_mut().for_each(|v| *v *= g);
        }
        x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Ok(AudioClip { samples: x, ..clip.clone() })
    }

    pub fn augment<R: Rng + ?Sized>(&self, clip: &AudioClip, rng: &mut R) -> Result<AudioClip> {
        let plan = self.sample_plan(rng);
        self.apply_plan(clip, &plan)
    }
}

/// Delays (positive) or advances the signal by `s` samples, filling with zeros.
pub fn shift(x: &[f64], s: isize) -> Vec<f64> {
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            let j = i - s;
            if (0..n).contains(&j) {
                x[j as usize]
            } else {
                0.0
            }
        })
        .collect()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Gain applied to `noise` so that `10·log10(P_clean / P_noise) = snr_db`.
pub fn snr_scale(clean: &[f64], noise: &[f64], snr_db: f64) -> f64 {
    let pc = match power(clean) {
        p if p > 0.0 => p,
        _ => SILENT_REFERENCE_POWER,
    };
    let pn = power(noise);
    if pn == 0.0 {
        return 0.0;
    }
    (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `clean + g·noise` with `g` from [`snr_scale`]. No clamping.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    if clean.len() != noise.len() {
        return Err(KwsError::dim("mix_at_snr", &[clean.len()], &[noise.len()]));
    }
    let g = snr_scale(clean, noise, snr_db);
    Ok(clean.iter().zip(noise).map(|(c, n)| c + g * n).collect())
}

/// Hard-clips at the `(1 − threshold)` quantile of `|x|`.
pub fn clip_distort(x: &mut [f64], threshold: f64) {
    if x.is_empty() {
        return;
    }
    let mut mags: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let q = (1.0 - threshold).clamp(0.0, 1.0) * (mags.len() - 1) as f64;
    let (i, f) = (q.floor() as usize, q.fract());
    let a = mags[i] + f * (mags[(i + 1).min(mags.len() - 1)] - mags[i]);
    x.iter_mut().for_each(|v| *v = v.clamp(-a, a));
}

/// Seed for one clip in one epoch, independent of visiting order.
pub fn clip_seed(global: u64, epoch: u64, clip_id: u64) -> u64 {
    let mut h = splitmix(global);
    h = splitmix(h ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    splitmix(h ^ clip_id)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn clip_rng(global: u64, epoch: u64, clip_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(clip_seed(global, epoch, clip_id))
}
