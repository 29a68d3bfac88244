//! Phase-vocoder time stretching and pitch shifting.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{KwsError, Result};
use crate::frontend::hann;

const N_FFT: usize = 512;
const HOP: usize = 128;

fn stft(x: &[f64], window: &[f64]) -> Vec<Vec<Complex<f64>>> {
    let pad = N_FFT / 2;
    let mut padded = vec![0.0; pad];
    padded.extend_from_slice(x);
    padded.resize(padded.len() + pad, 0.0);
    let fft = FftPlanner::new().plan_fft_forward(N_FFT);
    let n_frames = 1 + (padded.len() - N_FFT) / HOP;
    (0..n_frames)
        .map(|f| {
            let mut buf: Vec<Complex<f64>> = padded[f * HOP..f * HOP + N_FFT]
                .iter()
                .zip(window)
                .map(|(s, w)| Complex::new(s * w, 0.0))
                .collect();
            fft.process(&mut buf);
            buf.truncate(N_FFT / 2 + 1);
            buf
        })
        .collect()
}

fn istft(frames: &[Vec<Complex<f64>>], window: &[f64], len: usize) -> Vec<f64> {
    let ifft = FftPlanner::new().plan_fft_inverse(N_FFT);
    let total = N_FFT + HOP * frames.len().saturating_sub(1);
    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for (f, half) in frames.iter().enumerate() {
        buf[..half.len()].copy_from_slice(half);
        for k in 1..N_FFT / 2 {
            buf[N_FFT - k] = half[k].conj();
        }
        ifft.process(&mut buf);
        for i in 0..N_FFT {
            out[f * HOP + i] += buf[i].re / N_FFT as f64 * window[i];
            norm[f * HOP + i] += window[i] * window[i];
        }
    }
    let pad = N_FFT / 2;
    (0..len)
        .map(|i| {
            let j = i + pad;
            match (out.get(j), norm.get(j)) {
                (Some(&o), Some(&n)) if n > 1e-10 => o / n,
                _ => 0.0,
            }
        })
        .collect()
}

fn wrap(phase: f64) -> f64 {
    phase - 2.0 * PI * (phase / (2.0 * PI)).round()
}

/// Plays `x` at `rate` times its speed without changing pitch; the result
/// has `round(len / rate)` samples.
pub fn time_stretch(x: &[f64], rate: f64) -> Result<Vec<f64>> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(KwsError::config(format!("stretch rate must be positive, got {rate}")));
    }
    let out_len = (x.len() as f64 / rate).round() as usize;
    if x.is_empty() {
        return Ok(vec![0.0; out_len]);
    }
    let window = hann(N_FFT);
    let spec = stft(x, &window);
    let n_bins = N_FFT / 2 + 1;
    let advance: Vec<f64> = (0..n_bins).map(|k| 2.0 * PI * HOP as f64 * k as f64 / N_FFT as f64).collect();
    let mut phase: Vec<f64> = spec[0].iter().map(|c| c.arg()).collect();
    let mut frames = Vec::new();
    let mut t = 0.0;
    while t < spec.len() as f64 {
        let i = t.floor() as usize;
        let frac = t - i as f64;
        let a = &spec[i];
        let b = spec.get(i + 1).unwrap_or(a);
        let frame: Vec<Complex<f64>> = (0..n_bins)
            .map(|k| Complex::from_polar((1.0 - frac) * a[k].norm() + frac * b[k].norm(), phase[k]))
            .collect();
        frames.push(frame);
        for k in 0..n_bins {
            let dphi = wrap(b[k].arg() - a[k].arg() - advance[k]);
            phase[k] += advance[k] + dphi;
        }
        t += rate;
    }
    Ok(istft(&frames, &window, out_len))
}

/// Linear-interpolation resampling to `len` samples.
pub fn resample_linear(x: &[f64], len: usize) -> Vec<f64> {
    if x.is_empty() || len == 0 {
        return vec![0.0; len];
    }
    let step = x.len() as f64 / len as f64;
    (0..len)
        .map(|i| {
            let p = i as f64 * step;
            let j = p.floor() as usize;
            let f = p - j as f64;
            let a = x[j.min(x.len() - 1)];
            let b = x[(j + 1).min(x.len() - 1)];
            a + f * (b - a)
        })
        .collect()
}

/// Shifts pitch by `semitones` keeping the length: stretch by `2^(s/12)`,
/// then resample back.
pub fn pitch_shift(x: &[f64], semitones: f64) -> Result<Vec<f64>> {
    let factor = 2f64.powf(semitones / 12.0);
    let stretched = time_stretch(x, 1.0 / factor)?;
    Ok(resample_linear(&stretched, x.len()))
}
