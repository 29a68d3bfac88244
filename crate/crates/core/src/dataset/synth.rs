//! Synthetic corpus in the Speech Commands layout.
//!
//! Each keyword is a fixed sequence of voiced syllables (formant glides over
//! a harmonic source, optionally preceded by a fricative burst). Speakers
//! differ in pitch, vocal-tract length, tempo and loudness, and every
//! recording gets its own onset, jitter and background hiss. Used for
//! offline runs when the real archive is unavailable.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NOISE_DIR, TESTING_LIST, VALIDATION_LIST};
use crate::error::{KwsError, Result};
use crate::frontend::{encode_wav, CLIP_SAMPLES, SAMPLE_RATE};

const SR: f64 = SAMPLE_RATE as f64;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub keywords: Vec<String>,
    pub clips_per_keyword: usize,
    /// Per-keyword counts that replace `clips_per_keyword`.
    pub clip_counts: Vec<(String, usize)>,
    pub speakers: usize,
    pub noise_files: usize,
    pub noise_seconds: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            keywords: super::all_keywords().iter().map(|s| s.to_string()).collect(),
            clips_per_keyword: 40,
            clip_counts: Vec::new(),
            speakers: 60,
            noise_files: 4,
            noise_seconds: 10,
            validation_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn clips_for(&self, keyword: &str) -> usize {
        self.clip_counts.iter().find(|(k, _)| k == keyword).map_or(self.clips_per_keyword, |&(_, n)| n)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynthSummary {
    pub clips: usize,
    pub validation: usize,
    pub test: usize,
    pub noise_files: usize,
}

#[derive(Clone, Copy, Debug)]
struct Syllable {
    dur: f64,
    f1: (f64, f64),
    f2: (f64, f64),
    /// Centre frequency and length of a noise burst before the vowel.
    fricative: Option<(f64, f64)>,
    /// Relative pitch change across the syllable.
    intonation: f64,
}

#[derive(Clone, Copy, Debug)]
struct Speaker {
    f0: f64,
    tract: f64,
    tempo: f64,
    loudness: f64,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn template(keyword: &str) -> Vec<Syllable> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(keyword));
    let n = rng.gen_range(1..=3);
    (0..n)
        .map(|_| {
            Syllable {
                dur: rng.gen_range(0.12..0.24),
                f1: (rng.gen_range(280.0..850.0), rng.gen_range(280.0..850.0)),
                f2: (rng.gen_range(850.0..2500.0), rng.gen_range(850.0..2500.0)),
                fricative: rng.gen_bool(0.5).then(|| (rng.gen_range(2500.0..6500.0), rng.gen_range(0.03..0.08))),
                intonation: rng.gen_range(-0.25..0.25),
            }
        })
        .collect()
}

fn speaker<R: Rng>(rng: &mut R) -> Speaker {
    Speaker {
        f0: rng.gen_range(85.0..240.0),
        tract: rng.gen_range(0.88..1.15),
        tempo: rng.gen_range(0.85..1.15),
        loudness: rng.gen_range(0.25..0.8),
    }
}

/// RBJ band-pass with unit peak gain.
fn bandpass(x: &[f64], centre: f64, q: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * centre / SR;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = b0 * v + b2 * x2 - a1 * y1 - a2 * y2;
            (x2, x1, y2, y1) = (x1, v, y1, y);
            y
        })
        .collect()
}

fn resonance(f: f64, centre: f64, bw: f64) -> f64 {
    1.0 / (1.0 + ((f - centre) / bw).powi(2))
}

fn render<R: Rng>(syllables: &[Syllable], sp: &Speaker, rng: &mut R) -> Vec<f64> {
    let gap = 0.04;
    let jitter = |rng: &mut R| rng.gen_range(0.9..1.1);
    let parts: Vec<(Syllable, f64)> = syllables.iter().map(|s| (*s, s.dur * sp.tempo * jitter(rng))).collect();
    let fric_len = |s: &Syllable| s.fricative.map_or(0.0, |(_, d)| d * sp.tempo);
    let total: f64 = parts.iter().map(|(s, d)| d + fric_len(s) + gap).sum();
    let slack = (1.0 - total - 0.05).max(0.0);
    let mut t0 = 0.025 + rng.gen_range(0.0..=slack);
    let mut out = vec![0.0; CLIP_SAMPLES];
    let f0 = sp.f0 * jitter(rng).sqrt();

    for (s, dur) in parts {
        if let Some((centre, d)) = s.fricative {
            let len = (d * sp.tempo * SR) as usize;
            let noise: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let burst = bandpass(&noise, centre * sp.tract, 4.0);
            let start = (t0 * SR) as usize;
            for (i, v) in burst.iter().enumerate() {
                let env = (PI * i as f64 / len as f64).sin();
                if let Some(o) = out.get_mut(start + i) {
                    *o += 0.35 * env * v;
                }
            }
            t0 += d * sp.tempo;
        }
        let start = (t0 * SR) as usize;
        let len = (dur * SR) as usize;
        let mut phase = rng.gen_range(0.0..2.0 * PI);
        let mut gains = Vec::new();
        for i in 0..len {
            let u = i as f64 / len as f64;
            let pitch = f0 * (1.0 + s.intonation * u);
            if i % 32 == 0 {
                let f1 = (s.f1.0 + (s.f1.1 - s.f1.0) * u) * sp.tract;
                let f2 = (s.f2.0 + (s.f2.1 - s.f2.0) * u) * sp.tract;
                let f3 = 2900.0 * sp.tract;
                let n_h = (4000.0 / pitch) as usize;
                gains = (1..=n_h)
                    .map(|h| {
                        let f = h as f64 * pitch;
                        resonance(f, f1, 90.0) + 0.7 * resonance(f, f2, 130.0) + 0.3 * resonance(f, f3, 200.0)
                    })
                    .collect();
            }
            phase += 2.0 * PI * pitch / SR;
            let env = (PI * u).sin().powf(0.6);
            let v: f64 = gains.iter().enumerate().map(|(h, g)| g * ((h + 1) as f64 * phase).sin()).sum();
            if let Some(o) = out.get_mut(start + i) {
                *o += 0.12 * env * v;
            }
        }
        t0 += dur + gap;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let hiss = 10f64.powf(-rng.gen_range(25.0..45.0) / 20.0);
    out.iter().map(|v| (v / peak * sp.loudness + hiss * rng.gen_range(-1.0..1.0)).clamp(-1.0, 1.0)).collect()
}

fn noise_recording<R: Rng>(kind: usize, len: usize, rng: &mut R) -> Vec<f64> {
    let white: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f64> = match kind % 4 {
        0 => white,
        1 => {
            let mut b = 0.0;
            white.iter().map(|w| {
                b = 0.995 * b + 0.05 * w;
                b
            }).collect()
        }
        2 => {
            let hum = 50.0 + 10.0 * rng.gen::<f64>();
            white
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let t = i as f64 / SR;
                    (1..=4).map(|h| (2.0 * PI * hum * h as f64 * t).sin() / h as f64).sum::<f64>() + 0.2 * w
                })
                .collect()
        }
        _ => {
            let band = bandpass(&white, rng.gen_range(500.0..2000.0), 1.5);
            let rate = rng.gen_range(0.5..3.0);
            band.iter()
                .enumerate()
                .map(|(i, v)| v * (1.0 + 0.8 * (2.0 * PI * rate * i as f64 / SR).sin()))
                .collect()
        }
    };
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    x.iter().map(|v| 0.5 * v / peak).collect()
}

fn write(path: &Path, samples: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| KwsError::io(dir, e))?;
    }
    fs::write(path, encode_wav(samples, SAMPLE_RATE)?).map_err(|e| KwsError::io(path, e))
}

/// Writes keyword folders, background noise and split lists under `root`.
/// Speakers, not recordings, are assigned to splits.
pub fn generate(root: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    if cfg.speakers == 0 || cfg.keywords.iter().all(|k| cfg.clips_for(k) == 0) {
        return Err(KwsError::config("synthetic corpus needs keywords, clips and speakers"));
    }
    if cfg.validation_fraction + cfg.test_fraction >= 1.0 {
        return Err(KwsError::config("validation and test fractions must sum below 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<String> = (0..cfg.speakers).map(|_| format!("{:08x}", rng.gen::<u32>())).collect();
    let voices: Vec<Speaker> = (0..cfg.speakers).map(|_| speaker(&mut rng)).collect();
    let mut order: Vec<usize> = (0..cfg.speakers).collect();
    order.shuffle(&mut rng);
    let n_val = (cfg.validation_fraction * cfg.speakers as f64).round() as usize;
    let n_test = (cfg.test_fraction * cfg.speakers as f64).round() as usize;
    let split_of = |s: usize| {
        let rank = order.iter().position(|&o| o == s).unwrap_or(0);
        if rank < n_val {
            1
        } else if rank < n_val + n_test {
            2
        } else {
            0
        }
    };

    let mut summary = SynthSummary::default();
    let (mut val, mut test) = (String::new(), String::new());
    for kw in &cfg.keywords {
        let tpl = template(kw);
        for i in 0..cfg.clips_for(kw) {
            let s = (i + fnv1a(kw) as usize) % cfg.speakers;
            let rel = format!("{kw}/{}_nohash_{}.wav", ids[s], i / cfg.speakers);
            let mut clip_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(&rel));
            write(&root.join(&rel), &render(&tpl, &voices[s], &mut clip_rng))?;
            match split_of(s) {
                1 => {
                    val.push_str(&rel);
                    val.push('\n');
                    summary.validation += 1;
                }
                2 => {
                    test.push_str(&rel);
                    test.push('\n');
                    summary.test += 1;
                }
                _ => {}
            }
            summary.clips += 1;
        }
    }
    for k in 0..cfg.noise_files {
        let len = cfg.noise_seconds.max(1) * CLIP_SAMPLES;
        write(&root.join(NOISE_DIR).join(format!("synthetic_noise_{k}.wav")), &noise_recording(k, len, &mut rng))?;
        summary.noise_files += 1;
    }
    let put = |name: &str, text: &str| fs::write(root.join(name), text).map_err(|e| KwsError::io(root.join(name), e));
    put(VALIDATION_LIST, &val)?;
    put(TESTING_LIST, &test)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_manifest, load_noise_bank, Split, Subtask};

    #[test]
    fn corpus_round_trips_through_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            keywords: vec!["yes".into(), "no".into(), "wow".into()],
            clips_per_keyword: 20,
            speakers: 10,
            noise_files: 2,
            noise_seconds: 2,
            ..SynthConfig::default()
        };
        let s = generate(dir.path(), &cfg).unwrap();
        assert_eq!(s.clips, 60);
        let m = build_manifest(dir.path(), Subtask::Ten).unwrap();
        assert_eq!(m.entries.len(), 60);
        assert_eq!(m.count(Split::Validation), s.validation);
        assert_eq!(m.count(Split::Test), s.test);
        assert!(s.validation > 0 && s.test > 0);
        assert_eq!(load_noise_bank(dir.path()).unwrap().len(), 2);
        let clip = m.load_clip(0).unwrap();
        assert_eq!(clip.samples.len(), CLIP_SAMPLES);
        assert!(clip.samples.iter().any(|v| v.abs() > 0.1));
    }

    #[test]
    fn per_keyword_counts_override_the_default() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            keywords: vec!["yes".into(), "wow".into(), "bed".into()],
            clips_per_keyword: 6,
            clip_counts: vec![("wow".into(), 2), ("bed".into(), 0)],
            speakers: 4,
            noise_files: 0,
            ..SynthConfig::default()
        };
        assert_eq!(generate(dir.path(), &cfg).unwrap().clips, 8);
        assert!(!dir.path().join("bed").exists());
        let only_empty = SynthConfig { clip_counts: vec![("yes".into(), 0)], keywords: vec!["yes".into()], ..cfg };
        assert!(generate(dir.path(), &only_empty).is_err());
    }

    #[test]
    fn templates_are_stable_and_distinct() {
        let a = template("yes");
        let b = template("yes");
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert_ne!(format!("{a:?}"), format!("{:?}", template("no")));
    }

    #[test]
    fn same_seed_same_audio() {
        let sp = speaker(&mut ChaCha8Rng::seed_from_u64(1));
        let x = render(&template("go"), &sp, &mut ChaCha8Rng::seed_from_u64(2));
        let y = render(&template("go"), &sp, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(x, y);
        assert!(x.iter().all(|v| v.abs() <= 1.0));
    }
}
