use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::StftParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Complex short-time spectrum of one lead. Frames are full-length FFTs of
/// the Hann-windowed, centre-padded signal.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub window: usize,
    pub hop: usize,
    /// Length of the original signal.
    pub len: usize,
    pub frames: Vec<Vec<Complex<f64>>>,
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn check(len: usize, window: usize, hop: usize) -> Result<()> {
    if window == 0 || hop == 0 || hop > window / 2 {
        return Err(Error::invalid(
            "stft",
            format!("need 0 < hop <= window/2, got window {window}, hop {hop}"),
        ));
    }
    if len < window {
        return Err(Error::invalid(
            "stft",
            format!("signal length {len} is shorter than the window {window}"),
        ));
    }
    Ok(())
}

fn padded_len(len: usize, window: usize, hop: usize) -> usize {
    let p = len + window;
    window + (p - window).div_ceil(hop) * hop
}

pub fn stft(signal: &[f32], window: usize, hop: usize) -> Result<Spectrogram> {
    let len = signal.len();
    check(len, window, hop)?;
    let total = padded_len(len, window, hop);
    let pad = window / 2;
    let mut padded = vec![0.0f64; total];
    padded[pad..pad + len]
        .iter_mut()
        .zip(signal)
        .for_each(|(p, &s)| *p = s as f64);
    let w = hann(window);
    let fft = FftPlanner::new().plan_fft_forward(window);
    let frames = (0..=(total - window) / hop)
        .map(|f| {
            let mut buf: Vec<Complex<f64>> = padded[f * hop..f * hop + window]
                .iter()
                .zip(&w)
                .map(|(&s, &wi)| Complex::new(s * wi, 0.0))
                .collect();
            fft.process(&mut buf);
            buf
        })
        .collect();
    Ok(Spectrogram {
        window,
        hop,
        len,
        frames,
    })
}

/// Weighted overlap-add inverse of [`stft`].
pub fn istft(spec: &Spectrogram) -> Vec<f32> {
    let (window, hop) = (spec.window, spec.hop);
    let total = window + (spec.frames.len() - 1) * hop;
    let w = hann(window);
    let ifft = FftPlanner::new().plan_fft_inverse(window);
    let mut acc = vec![0.0f64; total];
    let mut norm = vec![0.0f64; total];
    for (f, frame) in spec.frames.iter().enumerate() {
        let mut buf = frame.clone();
        ifft.process(&mut buf);
        for (i, c) in buf.iter().enumerate() {
            acc[f * hop + i] += w[i] * c.re / window as f64;
            norm[f * hop + i] += w[i] * w[i];
        }
    }
    let pad = window / 2;
    (0..spec.len)
        .map(|t| {
            let n = norm[t + pad];
            if n > 1e-12 {
                (acc[t + pad] / n) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Scales every time-frequency magnitude of every lead by an independent
/// `Beta(α, β)` draw, keeping phase, then inverts.
pub fn stft_spectral_mask<R: Rng + ?Sized>(
    x: &Tensor,
    p: &StftParams,
    rng: &mut R,
) -> Result<Tensor> {
    let (leads, len) = (x.shape()[0], x.shape()[1]);
    check(len, p.window, p.hop)?;
    let beta = Beta::new(p.beta_alpha as f64, p.beta_beta as f64)
        .map_err(|e| Error::invalid("stft", format!("bad beta parameters: {e}")))?;
    let mut out = Vec::with_capacity(leads * len);
    for row in x.data().chunks(len) {
        let mut spec = stft(row, p.window, p.hop)?;
        if p.sample_mask {
            let n = p.window;
            for frame in &mut spec.frames {
                // mirror the gain onto the conjugate bin so the result stays real
                for k in 0..=n / 2 {
                    let g = beta.sample(rng);
                    frame[k] *= g;
                    if k != 0 && k != n - k {
                        frame[n - k] *= g;
                    }
                }
            }
        }
        out.extend(istft(&spec));
    }
    Tensor::new(vec![leads, len], out)
}
