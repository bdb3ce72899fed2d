//! Hann-windowed short-time Fourier transform.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::signal::AudioSignal;
use crate::error::{Error, Result};

/// STFT coefficients indexed `[channel][frame][bin]`.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub coeffs: Vec<Vec<Vec<Complex64>>>,
    pub frame_len: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn num_channels(&self) -> usize {
        self.coeffs.len()
    }

    pub fn num_frames(&self) -> usize {
        self.coeffs[0].len()
    }

    pub fn num_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }
}

/// Periodic Hann window; at 50% overlap its shifted copies sum to one.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn num_frames(len: usize, frame_len: usize, hop: usize) -> usize {
    if len < frame_len {
        0
    } else {
        1 + (len - frame_len) / hop
    }
}

pub fn stft(x: &AudioSignal, frame_len: usize, hop: usize) -> Result<Spectrogram> {
    if frame_len == 0 || frame_len % 2 != 0 {
        return Err(Error::InvalidArgument(format!("frame_len {frame_len} must be even")));
    }
    if hop == 0 || hop > frame_len {
        return Err(Error::InvalidArgument(format!(
            "hop {hop} must be in 1..={frame_len}"
        )));
    }
    if x.len() < frame_len {
        return Err(Error::TooShort {
            what: "STFT input",
            len: x.len(),
            min: frame_len,
        });
    }
    let frames = num_frames(x.len(), frame_len, hop);
    let bins = frame_len / 2 + 1;
    let window = hann(frame_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_len);
    let mut buf = vec![Complex64::new(0.0, 0.0); frame_len];
    let coeffs = x
        .channels()
        .iter()
        .map(|ch| {
            (0..frames)
                .map(|t| {
                    let seg = &ch[t * hop..t * hop + frame_len];
                    for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
                        *b = Complex64::new(s * w, 0.0);
                    }
                    fft.process(&mut buf);
                    buf[..bins].to_vec()
                })
                .collect()
        })
        .collect();
    Ok(Spectrogram {
        coeffs,
        frame_len,
        hop,
    })
}

/// Weighted overlap-add inverse of [`stft`] for one channel. Samples that no
/// frame covers come back as zero.
pub fn istft(spec: &Spectrogram, channel: usize) -> Vec<f64> {
    let n = spec.frame_len;
    let frames = &spec.coeffs[channel];
    let len = (frames.len().saturating_sub(1)) * spec.hop + n;
    let window = hann(n);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (t, half) in frames.iter().enumerate() {
        buf[..half.len()].copy_from_slice(half);
        for k in half.len()..n {
            buf[k] = half[n - k].conj();
        }
        ifft.process(&mut buf);
        for i in 0..n {
            out[t * spec.hop + i] += window[i] * buf[i].re / n as f64;
            norm[t * spec.hop + i] += window[i] * window[i];
        }
    }
    out.iter_mut()
        .zip(&norm)
        .for_each(|(o, &w)| *o = if w > 1e-10 { *o / w } else { 0.0 });
    out
}
