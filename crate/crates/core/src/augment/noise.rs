use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{GaussianParams, PowerlineParams, ShiftParams, WanderParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn normal(mean: f32, std: f32) -> Result<Normal<f32>> {
    Normal::new(mean, std)
        .map_err(|e| Error::invalid("augment", format!("bad normal parameters: {e}")))
}

fn phase<R: Rng + ?Sized>(rng: &mut R, uniform: bool) -> Result<f32> {
    if uniform {
        Ok(rng.random_range(0.0..2.0 * PI))
    } else {
        Ok(normal(0.0, 2.0 * PI)?.sample(rng))
    }
}

fn dims(x: &Tensor) -> (usize, usize) {
    (x.shape()[0], x.shape()[1])
}

/// Independent `N(0, σ²)` noise on every sample of every lead.
pub fn gaussian_noise<R: Rng + ?Sized>(
    x: &Tensor,
    p: &GaussianParams,
    rng: &mut R,
) -> Result<Tensor> {
    let dist = normal(0.0, p.sigma)?;
    let mut out = x.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v += dist.sample(rng));
    Ok(out)
}

/// `α Σ_k cos(2π t k f_p + φ)`, identical on every lead.
pub fn powerline_noise<R: Rng + ?Sized>(
    x: &Tensor,
    p: &PowerlineParams,
    fs: f32,
    rng: &mut R,
) -> Result<Tensor> {
    let (leads, len) = dims(x);
    let alpha = if p.max_amplitude > 0.0 {
        rng.random_range(0.0..p.max_amplitude)
    } else {
        0.0
    };
    let phi = phase(rng, p.uniform_phase)?;
    let noise: Vec<f32> = (0..len)
        .map(|i| {
            let t = i as f32 / fs;
            (1..=p.harmonics)
                .map(|k| alpha * (2.0 * PI * t * k as f32 * p.frequency_hz + phi).cos())
                .sum()
        })
        .collect();
    let mut out = x.clone();
    for lead in 0..leads {
        out.data_mut()[lead * len..(lead + 1) * len]
            .iter_mut()
            .zip(&noise)
            .for_each(|(v, n)| *v += n);
    }
    Ok(out)
}

/// Low-frequency drift `C Σ_k a cos(2π t k Δf + φ)`, drawn per lead.
pub fn baseline_wander<R: Rng + ?Sized>(
    x: &Tensor,
    p: &WanderParams,
    fs: f32,
    rng: &mut R,
) -> Result<Tensor> {
    let (leads, len) = dims(x);
    let c_dist = normal(p.c_mean, p.c_std)?;
    let mut out = x.clone();
    for lead in 0..leads {
        let c = c_dist.sample(rng);
        let a = if p.max_amplitude > 0.0 {
            rng.random_range(0.0..p.max_amplitude)
        } else {
            0.0
        };
        let df = if p.max_df_hz > p.min_df_hz {
            rng.random_range(p.min_df_hz..p.max_df_hz)
        } else {
            p.min_df_hz
        };
        let phi = phase(rng, p.uniform_phase)?;
        for (i, v) in out.data_mut()[lead * len..(lead + 1) * len]
            .iter_mut()
            .enumerate()
        {
            let t = i as f32 / fs;
            let drift: f32 = (1..=p.terms)
                .map(|k| a * (2.0 * PI * t * k as f32 * df + phi).cos())
                .sum();
            *v += c * drift;
        }
    }
    Ok(out)
}

/// Adds an offset to one contiguous window of `round(fraction·D)` samples
/// per lead. The offset magnitude is `N(mean, std²)` with a random sign.
pub fn baseline_shift<R: Rng + ?Sized>(x: &Tensor, p: &ShiftParams, rng: &mut R) -> Result<Tensor> {
    let (leads, len) = dims(x);
    let dist = normal(p.mean, p.std)?;
    let width = ((p.fraction * len as f32).round() as usize).min(len);
    let mut out = x.clone();
    for lead in 0..leads {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let offset = sign * dist.sample(rng);
        let start = rng.random_range(0..=len - width);
        let row = &mut out.data_mut()[lead * len..(lead + 1) * len];
        row[start..start + width]
            .iter_mut()
            .for_each(|v| *v += offset);
    }
    Ok(out)
}
