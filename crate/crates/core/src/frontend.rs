//! WAV decoding and log-mel features: 40 mel bands over 100 frames per
//! one-second clip.
//!
//! Feature contract: peak-normalized waveform, 320-sample periodic Hann
//! window, 160-sample hop, 80 samples of reflect padding on each side,
//! 512-point FFT power spectrum, 40 HTK-scale triangular filters spanning
//! 20 Hz to 8 kHz, `ln(x + 1e-6)`.

use std::io::Cursor;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{KwsError, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const CLIP_SAMPLES: usize = 16_000;
pub const N_MELS: usize = 40;
pub const N_FRAMES: usize = 100;
pub const WIN_LENGTH: usize = 320;
pub const HOP_LENGTH: usize = 160;
pub const N_FFT: usize = 512;
pub const F_MIN: f64 = 20.0;
pub const F_MAX: f64 = 8000.0;
pub const LOG_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: Option<usize>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>) -> Self {
        AudioClip { samples, sample_rate: SAMPLE_RATE, label: None }
    }

    pub fn silence() -> Self {
        Self::new(vec![0.0; CLIP_SAMPLES])
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }
}

/// Zero-pads at the end or center-crops to exactly `len` samples.
pub fn fit_length(mut x: Vec<f64>, len: usize) -> Vec<f64> {
    if x.len() > len {
        let start = (x.len() - len) / 2;
        x.drain(..start);
        x.truncate(len);
    } else {
        x.resize(len, 0.0);
    }
    x
}

/// Decodes a PCM-16 mono 16 kHz WAV file into a one-second clip.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    let decode = |field: &'static str, msg: String| KwsError::Decode { field, msg };
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| decode("header", e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(decode("format", "only integer PCM is supported".into()));
    }
    if spec.bits_per_sample != 16 {
        return Err(decode("bits_per_sample", format!("expected 16, got {}", spec.bits_per_sample)));
    }
    if spec.channels != 1 {
        return Err(decode("channels", format!("expected mono, got {} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(decode("sample_rate", format!("expected {SAMPLE_RATE} Hz, got {}", spec.sample_rate)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| decode("data", e.to_string()))?;
    Ok(AudioClip::new(fit_length(samples, CLIP_SAMPLES)))
}

/// Encodes samples in `[-1, 1]` as PCM-16 mono WAV at `sample_rate`.
pub fn encode_wav(samples: &[f64], sample_rate: u32) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(|e| KwsError::Decode {
            field: "header",
            msg: e.to_string(),
        })?;
        for &s in samples {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(v).map_err(|e| KwsError::Decode { field: "data", msg: e.to_string() })?;
        }
        w.finalize().map_err(|e| KwsError::Decode { field: "data", msg: e.to_string() })?;
    }
    Ok(buf.into_inner())
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, peak weight 1.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels + 2` band edges in Hz; filter `m` rises over `edges[m]..edges[m+1]`
    /// and falls over `edges[m+1]..edges[m+2]`.
    pub edges_hz: Vec<f64>,
    /// `[n_mels][n_fft/2 + 1]`.
    pub weights: Vec<Vec<f64>>,
    pub sample_rate: u32,
    pub n_fft: usize,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, f_lo: f64, f_hi: f64, sample_rate: u32) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 || n_fft < 2 || !(0.0..f_hi).contains(&f_lo) || f_hi > nyquist {
            return Err(KwsError::config(format!(
                "invalid filterbank: n_mels={n_mels}, n_fft={n_fft}, band {f_lo}..{f_hi} Hz at {sample_rate} Hz"
            )));
        }
        let (mlo, mhi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let weights = (0..n_mels)
            .map(|m| (0..n_bins).map(|b| triangle(&edges_hz[m..m + 3], b as f64 * bin_hz)).collect())
            .collect();
        Ok(MelFilterbank { edges_hz, weights, sample_rate, n_fft })
    }

    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.edges_hz.len() - 1]
    }

    /// Weight of filter `m` at an arbitrary frequency.
    pub fn response(&self, m: usize, f: f64) -> f64 {
        triangle(&self.edges_hz[m..m + 3], f)
    }
}

fn triangle(e: &[f64], f: f64) -> f64 {
    let up = (f - e[0]) / (e[1] - e[0]);
    let down = (e[2] - f) / (e[2] - e[1]);
    up.min(down).max(0.0)
}

pub fn mel_filterbank(n_mels: usize, n_fft: usize, f_lo: f64, f_hi: f64) -> Result<MelFilterbank> {
    MelFilterbank::new(n_mels, n_fft, f_lo, f_hi, SAMPLE_RATE)
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// Reusable feature extractor.
pub struct MelFrontend {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: MelFilterbank,
}

impl Default for MelFrontend {
    fn default() -> Self {
        Self::new()
    }
}

impl MelFrontend {
    pub fn new() -> Self {
        MelFrontend {
            fft: FftPlanner::new().plan_fft_forward(N_FFT),
            window: hann(WIN_LENGTH),
            bank: mel_filterbank(N_MELS, N_FFT, F_MIN, F_MAX).expect("default filterbank is valid"),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Power spectra of the framed, peak-normalized clip: `[N_FRAMES][N_FFT/2 + 1]`.
    pub fn power_frames(&self, samples: &[f64]) -> Result<Vec<Vec<f64>>> {
        if samples.len() != CLIP_SAMPLES {
            return Err(KwsError::Contract(format!(
                "mel_spectrogram needs {CLIP_SAMPLES} samples, got {}",
                samples.len()
            )));
        }
        crate::tensor::check_finite("mel_spectrogram", samples)?;
        let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let gain = if peak > 0.0 { 1.0 / peak } else { 1.0 };
        let padded = reflect_pad(samples, WIN_LENGTH / 4);
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut frames = Vec::with_capacity(N_FRAMES);
        for f in 0..N_FRAMES {
            let seg = &padded[f * HOP_LENGTH..f * HOP_LENGTH + WIN_LENGTH];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < WIN_LENGTH { Complex::new(seg[i] * gain * self.window[i], 0.0) } else { Complex::new(0.0, 0.0) };
            }
            self.fft.process(&mut buf);
            frames.push(buf[..N_FFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect());
        }
        Ok(frames)
    }

    /// Log-mel features `[N_MELS, N_FRAMES]`.
    pub fn features(&self, clip: &AudioClip) -> Result<Tensor> {
        let frames = self.power_frames(&clip.samples)?;
        let mut out = Tensor::zeros([N_MELS, N_FRAMES]);
        let data = out.data_mut();
        for (t, p) in frames.iter().enumerate() {
            for (m, w) in self.bank.weights.iter().enumerate() {
                let e: f64 = w.iter().zip(p).map(|(a, b)| a * b).sum();
                data[m * N_FRAMES + t] = (e + LOG_FLOOR).ln();
            }
        }
        Ok(out)
    }
}

/// Mirror padding that excludes the edge sample, `[3,2,1 | 1,2,3,4 | 3,2]`-style.
fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((1..=pad).map(|i| x[n - 1 - i]));
    out
}

fn shared() -> &'static MelFrontend {
    static FRONTEND: OnceLock<MelFrontend> = OnceLock::new();
    FRONTEND.get_or_init(MelFrontend::new)
}

/// Log-mel features `[40, 100]` of a one-second clip.
pub fn mel_spectrogram(clip: &AudioClip) -> Result<Tensor> {
    shared().features(clip)
}

/// Writes features as CSV: one row per mel band, one column per frame,
/// values in shortest round-trip form.
pub fn features_csv(features: &Tensor) -> String {
    let cols = features.shape()[1];
    let mut s = String::new();
    for row in features.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, amp: f64) -> Vec<f64> {
        (0..CLIP_SAMPLES).map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin()).collect()
    }

    fn wav_i16(samples: &[i16], rate: u32, channels: u16, bits: u16) -> Vec<u8> {
        let spec = hound::WavSpec { channels, sample_rate: rate, bits_per_sample: bits, sample_format: hound::SampleFormat::Int };
        let mut buf = Cursor::new(Vec::new());
        let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
        for &s in samples {
            if bits == 16 {
                w.write_sample(s).unwrap();
            } else {
                w.write_sample(s as i32).unwrap();
            }
        }
        w.finalize().unwrap();
        buf.into_inner()
    }

    #[test]
    fn decode_scales_and_pads() {
        let clip = decode_wav(&wav_i16(&[0; 16000], 16000, 1, 16)).unwrap();
        assert!(clip.samples.iter().all(|&x| x == 0.0));
        let clip = decode_wav(&wav_i16(&[-32768, 16384], 16000, 1, 16)).unwrap();
        assert_eq!(clip.samples[0], -1.0);
        assert_eq!(clip.samples[1], 0.5);
        let half = decode_wav(&wav_i16(&[100; 8000], 16000, 1, 16)).unwrap();
        assert_eq!(half.samples.len(), 16000);
        assert!(half.samples[8000..].iter().all(|&x| x == 0.0));
        assert!(half.samples[..8000].iter().all(|&x| x != 0.0));
    }

    #[test]
    fn decode_center_crops_long_clips() {
        let long: Vec<i16> = (0..20000).map(|i| (i % 1000) as i16).collect();
        let clip = decode_wav(&wav_i16(&long, 16000, 1, 16)).unwrap();
        assert_eq!(clip.samples.len(), 16000);
        assert_eq!(clip.samples[0], (2000 % 1000) as f64 / 32768.0);
    }

    #[test]
    fn decode_errors_name_the_field() {
        let field = |bytes: &[u8]| match decode_wav(bytes) {
            Err(KwsError::Decode { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(&wav_i16(&[0; 10], 8000, 1, 16)), "sample_rate");
        assert_eq!(field(&wav_i16(&[0; 10], 16000, 2, 16)), "channels");
        assert_eq!(field(&wav_i16(&[0; 10], 16000, 1, 24)), "bits_per_sample");
        assert_eq!(field(b"RIFF\0\0\0\0WAVEjunk"), "header");
        assert_eq!(field(b"not a wav"), "header");
    }

    #[test]
    fn wav_round_trip() {
        let x = sine(300.0, 0.5);
        let clip = decode_wav(&encode_wav(&x, SAMPLE_RATE).unwrap()).unwrap();
        assert!(clip.samples.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 0.5 / 32768.0 + 1e-12));
    }

    #[test]
    fn silence_is_the_log_floor() {
        let f = mel_spectrogram(&AudioClip::silence()).unwrap();
        assert_eq!(f.shape(), &[40, 100]);
        assert!(f.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn wrong_length_is_a_contract_error() {
        let clip = AudioClip::new(vec![0.0; 15999]);
        assert!(matches!(mel_spectrogram(&clip), Err(KwsError::Contract(_))));
    }

    #[test]
    fn one_khz_peaks_in_the_band_that_responds_most() {
        let f = mel_spectrogram(&AudioClip::new(sine(1000.0, 0.3))).unwrap();
        let fb = mel_filterbank(40, 512, 20.0, 8000.0).unwrap();
        let want = (0..40).max_by(|&a, &b| fb.response(a, 1000.0).total_cmp(&fb.response(b, 1000.0))).unwrap();
        let mean_band = |m: usize| f.data()[m * 100..(m + 1) * 100].iter().sum::<f64>();
        let got = (0..40).max_by(|&a, &b| mean_band(a).total_cmp(&mean_band(b))).unwrap();
        assert_eq!(got, want);
        assert!(fb.edges_hz[want] < 1000.0 && 1000.0 < fb.edges_hz[want + 2]);
    }

    #[test]
    fn filters_are_unimodal_and_ordered() {
        let fb = mel_filterbank(40, 512, 20.0, 8000.0).unwrap();
        for w in &fb.weights {
            assert!(w.iter().all(|&x| x >= 0.0));
            let peak = w.iter().cloned().fold(0.0, f64::max);
            assert!(peak > 0.0);
            let argmax: Vec<usize> = (0..w.len()).filter(|&i| w[i] == peak).collect();
            assert_eq!(argmax.len(), 1);
            let p = argmax[0];
            assert!(w[..=p].windows(2).all(|s| s[0] <= s[1]));
            assert!(w[p..].windows(2).all(|s| s[0] >= s[1]));
        }
        assert!(fb.centers_hz().windows(2).all(|c| c[0] < c[1]));
        for m in 0..39 {
            assert!(fb.weights[m].iter().zip(&fb.weights[m + 1]).any(|(a, b)| *a > 0.0 && *b > 0.0));
        }
    }

    #[test]
    fn single_filter_spans_the_band() {
        let fb = mel_filterbank(1, 512, 20.0, 8000.0).unwrap();
        assert_eq!(fb.edges_hz.len(), 3);
        assert!((fb.edges_hz[0] - 20.0).abs() < 1e-9);
        assert!((fb.edges_hz[2] - 8000.0).abs() < 1e-9);
        assert!(mel_filterbank(4, 512, 8000.0, 20.0).is_err());
        assert!(mel_filterbank(4, 512, 20.0, 9000.0).is_err());
    }

    #[test]
    fn shift_by_whole_hops_shifts_interior_frames() {
        // Content kept away from the edges so the peak survives the shift.
        let mut x = vec![0.0; CLIP_SAMPLES];
        for (i, v) in x.iter_mut().enumerate().take(12000).skip(3000) {
            *v = 0.4 * (i as f64 * 0.05).sin() * (i as f64 * 0.0011).cos();
        }
        let j = 3;
        let mut shifted = vec![0.0; j * 160];
        shifted.extend_from_slice(&x[..CLIP_SAMPLES - j * 160]);
        let a = mel_spectrogram(&AudioClip::new(x)).unwrap();
        let b = mel_spectrogram(&AudioClip::new(shifted)).unwrap();
        for m in 0..40 {
            for t in 2..100 - j - 2 {
                assert!((a.at(&[m, t]) - b.at(&[m, t + j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reflect_padding_mirrors_without_the_edge() {
        assert_eq!(reflect_pad(&[1.0, 2.0, 3.0, 4.0], 2), [3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0]);
    }

    #[test]
    fn features_are_deterministic_and_floored() {
        let x: Vec<f64> = (0..CLIP_SAMPLES).map(|i| ((i * 7919) % 2003) as f64 / 2003.0 - 0.5).collect();
        let a = mel_spectrogram(&AudioClip::new(x.clone())).unwrap();
        let b = mel_spectrogram(&AudioClip::new(x)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v >= LOG_FLOOR.ln()));
    }
}
