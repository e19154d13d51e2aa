use rand::Rng;

use super::PeakmaskParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_p(p: f32) -> Result<f64> {
    if (0.0..=1.0).contains(&p) {
        Ok(p as f64)
    } else {
        Err(Error::invalid(
            "mask",
            format!("probability must lie in [0, 1], got {p}"),
        ))
    }
}

fn zero_steps(x: &Tensor, masked: &[bool]) -> Tensor {
    let len = masked.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(len) {
        row.iter_mut()
            .zip(masked)
            .filter(|(_, &m)| m)
            .for_each(|(v, _)| *v = 0.0);
    }
    out
}

/// Zeroes each timestep with probability `p`, the same steps on every lead.
pub fn random_mask<R: Rng + ?Sized>(x: &Tensor, p: f32, rng: &mut R) -> Result<Tensor> {
    let p = check_p(p)?;
    let masked: Vec<bool> = (0..x.shape()[1]).map(|_| rng.random_bool(p)).collect();
    Ok(zero_steps(x, &masked))
}

/// Zeroes one window of `round(p·D)` consecutive samples per lead.
pub fn block_mask<R: Rng + ?Sized>(x: &Tensor, p: f32, rng: &mut R) -> Result<Tensor> {
    check_p(p)?;
    let len = x.shape()[1];
    let width = ((p * len as f32).round() as usize).min(len);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(len) {
        let start = rng.random_range(0..=len - width);
        row[start..start + width].fill(0.0);
    }
    Ok(out)
}

/// Zeroes the timesteps whose lead-average exceeds the record average, or
/// with probability `complement_prob` every other timestep instead. A
/// record with no such timestep is returned unchanged.
pub fn peak_mask<R: Rng + ?Sized>(x: &Tensor, p: &PeakmaskParams, rng: &mut R) -> Result<Tensor> {
    let (leads, len) = (x.shape()[0], x.shape()[1]);
    let data = x.data();
    let lead_mean: Vec<f64> = (0..len)
        .map(|t| (0..leads).map(|l| data[l * len + t] as f64).sum::<f64>() / leads as f64)
        .collect();
    let overall = lead_mean.iter().sum::<f64>() / len as f64;
    // relative margin so rounding in the mean cannot flag a flat record
    let margin = 1e-9 * overall.abs().max(1e-30);
    let mut masked: Vec<bool> = lead_mean.iter().map(|&m| m - overall > margin).collect();
    let complement = rng.random_bool(p.complement_prob.clamp(0.0, 1.0));
    if !masked.iter().any(|&m| m) {
        return Ok(x.clone());
    }
    if complement {
        masked.iter_mut().for_each(|m| *m = !*m);
    }
    Ok(zero_steps(x, &masked))
}
